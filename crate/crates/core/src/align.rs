//! Shared latent space for collaborative and semantic item embeddings.
//!
//! Two affine encoders map a collaborative embedding (`f_I`) and a text
//! embedding (`f_T`) into the same latent space; an affine decoder per
//! modality maps back. Training minimises the sum of
//!
//! * the alignment loss: mean over user sequences of the mean squared gap
//!   `|f_I(e) - f_T(Q)|^2` over the sequence's items,
//! * the reconstruction loss: `alpha` times the nested-mean error of the
//!   collaborative autoencoder plus `beta` times that of the text one,
//! * the recommendation loss: binary cross-entropy of
//!   `x . dec_I(f_I(e))` over (user, positive, negative) triples, summed.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cf::CfModel;
use crate::checkpoint::Checkpoint;
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::gradcheck::{max_relative_error, FD_STEP};
use crate::linalg::{bce_with_logit, normal_matrix, xavier, Matrix, Vector};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{flat_mut, tref, Params, TensorRef};
use crate::semantic::{SemanticStore, SEMANTIC_DIM};

pub const LATENT_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub latent_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    /// User sequences per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            alpha: 0.5,
            beta: 0.2,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("align.latent_dim", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("align.alpha", "must lie in (0, 1]"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("align.beta", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("align.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "align.learning_rate",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Collaborative,
    Semantic,
}

/// Encoder and decoder weights. Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams {
    pub enc_collab_w: Matrix,
    pub enc_collab_b: Vector,
    pub enc_sem_w: Matrix,
    pub enc_sem_b: Vector,
    pub dec_collab_w: Matrix,
    pub dec_collab_b: Vector,
    pub dec_sem_w: Matrix,
    pub dec_sem_b: Vector,
}

impl Params for AlignParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            tref("enc_collab_w", &self.enc_collab_w),
            tref("enc_collab_b", &self.enc_collab_b),
            tref("enc_sem_w", &self.enc_sem_w),
            tref("enc_sem_b", &self.enc_sem_b),
            tref("dec_collab_w", &self.dec_collab_w),
            tref("dec_collab_b", &self.dec_collab_b),
            tref("dec_sem_w", &self.dec_sem_w),
            tref("dec_sem_b", &self.dec_sem_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            flat_mut(&mut self.enc_collab_w),
            flat_mut(&mut self.enc_collab_b),
            flat_mut(&mut self.enc_sem_w),
            flat_mut(&mut self.enc_sem_b),
            flat_mut(&mut self.dec_collab_w),
            flat_mut(&mut self.dec_collab_b),
            flat_mut(&mut self.dec_sem_w),
            flat_mut(&mut self.dec_sem_b),
        ]
    }
}

impl AlignParams {
    pub fn zeros(collab_dim: usize, sem_dim: usize, latent: usize) -> Self {
        Self {
            enc_collab_w: Array2::zeros((latent, collab_dim)),
            enc_collab_b: Array1::zeros(latent),
            enc_sem_w: Array2::zeros((latent, sem_dim)),
            enc_sem_b: Array1::zeros(latent),
            dec_collab_w: Array2::zeros((collab_dim, latent)),
            dec_collab_b: Array1::zeros(collab_dim),
            dec_sem_w: Array2::zeros((sem_dim, latent)),
            dec_sem_b: Array1::zeros(sem_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        collab_dim: usize,
        sem_dim: usize,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            enc_collab_w: xavier(latent, collab_dim, rng),
            enc_collab_b: Array1::zeros(latent),
            enc_sem_w: xavier(latent, sem_dim, rng),
            enc_sem_b: Array1::zeros(latent),
            dec_collab_w: xavier(collab_dim, latent, rng),
            dec_collab_b: Array1::zeros(collab_dim),
            dec_sem_w: xavier(sem_dim, latent, rng),
            dec_sem_b: Array1::zeros(sem_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentNetwork {
    pub params: AlignParams,
    pub alpha: f64,
    pub beta: f64,
}

/// The items of one user sequence: `(e^c_q, Q_q)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignGroup {
    pub pairs: Vec<(Vector, Vector)>,
}

/// `(x^p, e^c_{q+}, e^c_{q-})`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecTriple {
    pub user: Vector,
    pub positive: Vector,
    pub negative: Vector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignBatch {
    pub groups: Vec<AlignGroup>,
    pub triples: Vec<RecTriple>,
}

/// The three loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub align: f64,
    pub reconstruction: f64,
    pub recommendation: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.align + self.reconstruction + self.recommendation
    }
}

fn affine(w: &Matrix, b: &Vector, x: ArrayView1<f64>) -> Vector {
    w.dot(&x) + b
}

/// All pairs of the non-empty groups stacked row-wise, each row weighted by
/// `1 / (groups * group size)` so weighted sums are nested means.
struct PairRows {
    e: Matrix,
    q: Matrix,
    weight: Vector,
}

impl PairRows {
    fn new(groups: &[AlignGroup]) -> Option<Self> {
        let live: Vec<&AlignGroup> = groups.iter().filter(|g| !g.pairs.is_empty()).collect();
        let first = live.first()?.pairs.first()?;
        let n: usize = live.iter().map(|g| g.pairs.len()).sum();
        let mut e = Matrix::zeros((n, first.0.len()));
        let mut q = Matrix::zeros((n, first.1.len()));
        let mut weight = Vector::zeros(n);
        let mut i = 0;
        for g in &live {
            let w = 1.0 / (live.len() * g.pairs.len()) as f64;
            for (ev, qv) in &g.pairs {
                e.row_mut(i).assign(ev);
                q.row_mut(i).assign(qv);
                weight[i] = w;
                i += 1;
            }
        }
        Some(Self { e, q, weight })
    }
}

struct PairForward {
    a: Matrix,
    s: Matrix,
    r: Matrix,
    t: Matrix,
}

struct PairLosses {
    align: f64,
    item: f64,
    text: f64,
}

/// `g_w += d x^T`, `g_b += d`.
fn accumulate(gw: &mut Matrix, gb: &mut Vector, d: &Vector, x: ArrayView1<f64>) {
    let d2 = d.view().insert_axis(Axis(1));
    let x2 = x.insert_axis(Axis(0));
    ndarray::linalg::general_mat_mul(1.0, &d2, &x2, 1.0, gw);
    *gb += d;
}

impl AlignmentNetwork {
    pub fn new(params: AlignParams, alpha: f64, beta: f64) -> Self {
        Self {
            params,
            alpha,
            beta,
        }
    }

    pub fn init<R: Rng + ?Sized>(collab_dim: usize, config: &AlignConfig, rng: &mut R) -> Self {
        Self::with_dims(collab_dim, SEMANTIC_DIM, config, rng)
    }

    /// Like [`AlignmentNetwork::init`] with an explicit semantic width,
    /// for small test networks.
    pub fn with_dims<R: Rng + ?Sized>(
        collab_dim: usize,
        sem_dim: usize,
        config: &AlignConfig,
        rng: &mut R,
    ) -> Self {
        Self::new(
            AlignParams::init(collab_dim, sem_dim, config.latent_dim, rng),
            config.alpha,
            config.beta,
        )
    }

    pub fn collab_dim(&self) -> usize {
        self.params.enc_collab_w.ncols()
    }

    pub fn sem_dim(&self) -> usize {
        self.params.enc_sem_w.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.params.enc_collab_w.nrows()
    }

    pub fn encode(&self, modality: Modality, input: ArrayView1<f64>) -> Result<Vector> {
        let p = &self.params;
        let (w, b) = match modality {
            Modality::Collaborative => (&p.enc_collab_w, &p.enc_collab_b),
            Modality::Semantic => (&p.enc_sem_w, &p.enc_sem_b),
        };
        if input.len() != w.ncols() {
            return Err(Error::contract(format!(
                "{modality:?} encoder expects {} inputs, got {}",
                w.ncols(),
                input.len()
            )));
        }
        Ok(affine(w, b, input))
    }

    pub fn decode(&self, modality: Modality, latent: ArrayView1<f64>) -> Result<Vector> {
        let p = &self.params;
        let (w, b) = match modality {
            Modality::Collaborative => (&p.dec_collab_w, &p.dec_collab_b),
            Modality::Semantic => (&p.dec_sem_w, &p.dec_sem_b),
        };
        if latent.len() != w.ncols() {
            return Err(Error::contract(format!(
                "{modality:?} decoder expects {} inputs, got {}",
                w.ncols(),
                latent.len()
            )));
        }
        Ok(affine(w, b, latent))
    }

    pub fn alignment_loss(&self, groups: &[AlignGroup]) -> f64 {
        self.pair_losses(groups).map(|l| l.align).unwrap_or(0.0)
    }

    /// `(L_item-recon, L_text-recon)` before weighting.
    pub fn reconstruction_parts(&self, groups: &[AlignGroup]) -> (f64, f64) {
        self.pair_losses(groups)
            .map(|l| (l.item, l.text))
            .unwrap_or((0.0, 0.0))
    }

    pub fn reconstruction_loss(&self, groups: &[AlignGroup]) -> f64 {
        let (item, text) = self.reconstruction_parts(groups);
        self.alpha * item + self.beta * text
    }

    fn pair_losses(&self, groups: &[AlignGroup]) -> Option<PairLosses> {
        let rows = PairRows::new(groups)?;
        let f = self.pair_forward(&rows);
        let weighted = |m: &Matrix| -> f64 {
            m.rows()
                .into_iter()
                .zip(rows.weight.iter())
                .map(|(r, w)| w * r.dot(&r))
                .sum()
        };
        Some(PairLosses {
            align: weighted(&(&f.a - &f.s)),
            item: weighted(&(&f.r - &rows.e)),
            text: weighted(&(&f.t - &rows.q)),
        })
    }

    fn pair_forward(&self, rows: &PairRows) -> PairForward {
        let p = &self.params;
        let a = rows.e.dot(&p.enc_collab_w.t()) + &p.enc_collab_b;
        let s = rows.q.dot(&p.enc_sem_w.t()) + &p.enc_sem_b;
        let r = a.dot(&p.dec_collab_w.t()) + &p.dec_collab_b;
        let t = s.dot(&p.dec_sem_w.t()) + &p.dec_sem_b;
        PairForward { a, s, r, t }
    }

    /// Score of `user` against the collaborative reconstruction of `e`.
    pub fn rec_logit(&self, user: ArrayView1<f64>, e: ArrayView1<f64>) -> f64 {
        let p = &self.params;
        let a = affine(&p.enc_collab_w, &p.enc_collab_b, e);
        let r = affine(&p.dec_collab_w, &p.dec_collab_b, a.view());
        user.dot(&r)
    }

    pub fn recommendation_loss(&self, triples: &[RecTriple]) -> f64 {
        triples
            .iter()
            .map(|t| {
                bce_with_logit(self.rec_logit(t.user.view(), t.positive.view()), true).0
                    + bce_with_logit(self.rec_logit(t.user.view(), t.negative.view()), false).0
            })
            .sum()
    }

    pub fn loss_parts(&self, batch: &AlignBatch) -> LossParts {
        let (align, reconstruction) = match self.pair_losses(&batch.groups) {
            Some(l) => (l.align, self.alpha * l.item + self.beta * l.text),
            None => (0.0, 0.0),
        };
        LossParts {
            align,
            reconstruction,
            recommendation: self.recommendation_loss(&batch.triples),
        }
    }

    pub fn total_loss(&self, batch: &AlignBatch) -> f64 {
        self.loss_parts(batch).total()
    }

    /// Analytic gradient of [`AlignmentNetwork::total_loss`].
    pub fn gradient(&self, batch: &AlignBatch) -> AlignParams {
        let p = &self.params;
        let mut g = AlignParams::zeros(self.collab_dim(), self.sem_dim(), self.latent_dim());
        if let Some(rows) = PairRows::new(&batch.groups) {
            let f = self.pair_forward(&rows);
            let w = rows.weight.view().insert_axis(Axis(1));
            let gap = &f.a - &f.s;
            let mut da = &gap * &w * 2.0;
            let mut ds = &gap * &w * -2.0;

            let dr = (&f.r - &rows.e) * w * (2.0 * self.alpha);
            g.dec_collab_w += &dr.t().dot(&f.a);
            g.dec_collab_b += &dr.sum_axis(Axis(0));
            da += &dr.dot(&p.dec_collab_w);

            let dt = (&f.t - &rows.q) * w * (2.0 * self.beta);
            g.dec_sem_w += &dt.t().dot(&f.s);
            g.dec_sem_b += &dt.sum_axis(Axis(0));
            ds += &dt.dot(&p.dec_sem_w);

            g.enc_collab_w += &da.t().dot(&rows.e);
            g.enc_collab_b += &da.sum_axis(Axis(0));
            g.enc_sem_w += &ds.t().dot(&rows.q);
            g.enc_sem_b += &ds.sum_axis(Axis(0));
        }
        for t in &batch.triples {
            for (e, label) in [(&t.positive, true), (&t.negative, false)] {
                let a = affine(&p.enc_collab_w, &p.enc_collab_b, e.view());
                let r = affine(&p.dec_collab_w, &p.dec_collab_b, a.view());
                let (_, gl) = bce_with_logit(t.user.dot(&r), label);
                if gl == 0.0 {
                    continue;
                }
                let dr = &t.user * gl;
                accumulate(&mut g.dec_collab_w, &mut g.dec_collab_b, &dr, a.view());
                let da = p.dec_collab_w.t().dot(&dr);
                accumulate(&mut g.enc_collab_w, &mut g.enc_collab_b, &da, e.view());
            }
        }
        g
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("align")
            .with_meta("alpha", format!("{:?}", self.alpha))
            .with_meta("beta", format!("{:?}", self.beta))
            .with_meta("collab_dim", self.collab_dim())
            .with_meta("sem_dim", self.sem_dim())
            .with_meta("latent_dim", self.latent_dim())
            .with_params(&self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "align" {
            return Err(Error::Data(format!(
                "expected an align checkpoint, found `{}`",
                ck.kind
            )));
        }
        let mut params = AlignParams::zeros(
            ck.meta_parse("collab_dim")?,
            ck.meta_parse("sem_dim")?,
            ck.meta_parse("latent_dim")?,
        );
        ck.load_params(&mut params)?;
        Ok(Self::new(
            params,
            ck.meta_parse("alpha")?,
            ck.meta_parse("beta")?,
        ))
    }
}

/// Worst relative error between `gradient` and central differences of the
/// total loss, over every parameter. An empty batch scores 0.
pub fn gradient_check_with<G>(net: &AlignmentNetwork, batch: &AlignBatch, gradient: G) -> f64
where
    G: Fn(&AlignmentNetwork, &AlignBatch) -> AlignParams,
{
    let analytic = gradient(net, batch);
    max_relative_error(
        &net.params,
        &analytic,
        |p| AlignmentNetwork::new(p.clone(), net.alpha, net.beta).total_loss(batch),
        FD_STEP,
    )
}

pub fn gradient_check(net: &AlignmentNetwork, batch: &AlignBatch) -> f64 {
    gradient_check_with(net, batch, AlignmentNetwork::gradient)
}

/// Per-epoch mean loss parts of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignHistory {
    pub initial: LossParts,
    pub epochs: Vec<LossParts>,
}

fn mean_parts(net: &AlignmentNetwork, batches: &[AlignBatch]) -> LossParts {
    let mut acc = LossParts::default();
    for b in batches {
        let p = net.loss_parts(b);
        acc.align += p.align;
        acc.reconstruction += p.reconstruction;
        acc.recommendation += p.recommendation;
    }
    let n = batches.len().max(1) as f64;
    LossParts {
        align: acc.align / n,
        reconstruction: acc.reconstruction / n,
        recommendation: acc.recommendation / n,
    }
}

/// Gradient descent over `dataset`. Each batch takes `batch_size` groups
/// (and the triples with the same indices); both lists are shuffled in step.
///
/// Losses are logged as means over the batches of the epoch's fixed
/// (unshuffled) partition, evaluated after the epoch's updates.
pub fn train_alignment<R: Rng + ?Sized>(
    mut net: AlignmentNetwork,
    groups: &[AlignGroup],
    triples: &[RecTriple],
    config: &AlignConfig,
    rng: &mut R,
) -> Result<(AlignmentNetwork, AlignHistory)> {
    config.validate()?;
    let eval_batches: Vec<AlignBatch> = make_batches(
        groups,
        triples,
        &(0..groups.len()).collect::<Vec<_>>(),
        config.batch_size,
    );
    let mut history = AlignHistory {
        initial: mean_parts(&net, &eval_batches),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for (bi, batch) in make_batches(groups, triples, &order, config.batch_size)
            .iter()
            .enumerate()
        {
            let grad = net.gradient(batch);
            opt.step(&mut net.params, &grad);
            if !net.params.all_finite() {
                return Err(Error::Training {
                    stage: "align",
                    epoch,
                    batch: Some(bi),
                    message: "parameters became non-finite".into(),
                });
            }
        }
        let parts = mean_parts(&net, &eval_batches);
        if !parts.total().is_finite() {
            return Err(Error::Training {
                stage: "align",
                epoch,
                batch: None,
                message: "loss is not finite".into(),
            });
        }
        history.epochs.push(parts);
    }
    Ok((net, history))
}

fn make_batches(
    groups: &[AlignGroup],
    triples: &[RecTriple],
    order: &[usize],
    size: usize,
) -> Vec<AlignBatch> {
    order
        .chunks(size)
        .map(|idx| AlignBatch {
            groups: idx.iter().map(|&i| groups[i].clone()).collect(),
            triples: idx
                .iter()
                .filter_map(|&i| triples.get(i).cloned())
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    CollaborativePath,
    SemanticPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedEmbedding {
    pub item: ItemId,
    pub vector: Vector,
    pub source: EmbeddingSource,
}

/// `f_I(e^c_q)` for items the recommender knows, `f_T(Q_q)` otherwise.
pub fn unified_item_embedding(
    net: &AlignmentNetwork,
    item: &ItemId,
    cf: &CfModel,
    semantic: &SemanticStore,
) -> Result<UnifiedEmbedding> {
    if let Some(e) = cf.item_embedding(item) {
        return Ok(UnifiedEmbedding {
            item: item.clone(),
            vector: net.encode(Modality::Collaborative, e.view())?,
            source: EmbeddingSource::CollaborativePath,
        });
    }
    match semantic.get(item) {
        Some(q) => Ok(UnifiedEmbedding {
            item: item.clone(),
            vector: net.encode(Modality::Semantic, q.view())?,
            source: EmbeddingSource::SemanticPath,
        }),
        None => Err(Error::UnknownItem(item.0.clone())),
    }
}

/// A collaborative-space vector for any item: the real embedding when the
/// recommender knows it, else `dec_I(f_T(Q_q))`. Lets user representations
/// be computed over histories of unseen items.
pub fn collaborative_or_pseudo(
    net: &AlignmentNetwork,
    item: &ItemId,
    cf: &CfModel,
    semantic: &SemanticStore,
) -> Result<(Vector, EmbeddingSource)> {
    if let Some(e) = cf.item_embedding(item) {
        return Ok((e, EmbeddingSource::CollaborativePath));
    }
    let q = semantic
        .get(item)
        .ok_or_else(|| Error::UnknownItem(item.0.clone()))?;
    let z = net.encode(Modality::Semantic, q.view())?;
    Ok((
        net.decode(Modality::Collaborative, z.view())?,
        EmbeddingSource::SemanticPath,
    ))
}

/// Synthetic data where the text embedding is an exact linear image of the
/// collaborative one, `Q = A e`, so perfect alignment is reachable.
#[derive(Debug, Clone)]
pub struct LinearSuite {
    pub groups: Vec<AlignGroup>,
    /// Items never placed in a group, for generalisation checks.
    pub held_out: Vec<(Vector, Vector)>,
}

pub fn linear_suite<R: Rng + ?Sized>(
    collab_dim: usize,
    sem_dim: usize,
    items: usize,
    held_out: usize,
    sequences: usize,
    seq_len: usize,
    rng: &mut R,
) -> LinearSuite {
    let a = normal_matrix(sem_dim, collab_dim, 1.0 / (collab_dim as f64).sqrt(), rng);
    let pair = |rng: &mut R| {
        let e = normal_matrix(1, collab_dim, 1.0, rng).row(0).to_owned();
        let q = a.dot(&e);
        (e, q)
    };
    let train: Vec<(Vector, Vector)> = (0..items).map(|_| pair(rng)).collect();
    let held_out = (0..held_out).map(|_| pair(rng)).collect();
    let groups = (0..sequences)
        .map(|_| AlignGroup {
            pairs: (0..seq_len)
                .map(|_| train[rng.random_range(0..items)].clone())
                .collect(),
        })
        .collect();
    LinearSuite { groups, held_out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_config() -> AlignConfig {
        AlignConfig {
            latent_dim: 3,
            ..AlignConfig::default()
        }
    }

    fn random_batch(
        rng: &mut crate::rng::SeededRng,
        d: usize,
        s: usize,
        triples: usize,
    ) -> AlignBatch {
        let v = |n: usize, rng: &mut crate::rng::SeededRng| {
            normal_matrix(1, n, 1.0, rng).row(0).to_owned()
        };
        let groups = (0..3)
            .map(|g| AlignGroup {
                pairs: (0..g + 1).map(|_| (v(d, rng), v(s, rng))).collect(),
            })
            .collect();
        let triples = (0..triples)
            .map(|_| RecTriple {
                user: v(d, rng) * 0.5,
                positive: v(d, rng),
                negative: v(d, rng),
            })
            .collect();
        AlignBatch { groups, triples }
    }

    fn identity_net(d: usize) -> AlignmentNetwork {
        let mut p = AlignParams::zeros(d, d, d);
        p.enc_collab_w = Array2::eye(d);
        p.enc_sem_w = Array2::eye(d);
        AlignmentNetwork::new(p, 0.5, 0.2)
    }

    #[test]
    fn encode_zero_and_identity() {
        let net = AlignmentNetwork::new(AlignParams::zeros(4, 6, 3), 0.5, 0.2);
        assert_eq!(
            net.encode(Modality::Collaborative, array![1.0, 2.0, 3.0, 4.0].view())
                .unwrap(),
            Array1::<f64>::zeros(3)
        );
        let net = identity_net(4);
        let x = array![1.0, -2.0, 0.5, 3.0];
        assert_eq!(net.encode(Modality::Collaborative, x.view()).unwrap(), x);
        assert!(net.encode(Modality::Semantic, array![1.0].view()).is_err());
        assert_eq!(
            net.decode(Modality::Semantic, Array1::zeros(4).view())
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn encode_matches_dense_oracle() {
        let mut rng = seeded(1);
        let net = AlignmentNetwork::with_dims(5, 7, &small_config(), &mut rng);
        let mut net = net;
        net.params.enc_sem_b = array![0.1, -0.2, 0.3];
        let x = normal_matrix(1, 7, 1.0, &mut rng).row(0).to_owned();
        let out = net.encode(Modality::Semantic, x.view()).unwrap();
        for i in 0..3 {
            let mut acc = net.params.enc_sem_b[i];
            for j in 0..7 {
                acc += net.params.enc_sem_w[[i, j]] * x[j];
            }
            assert_abs_diff_eq!(out[i], acc, epsilon = 1e-12);
        }
    }

    // one-dimensional identity encoders with chosen gaps
    fn gap_group(gaps: &[f64]) -> AlignGroup {
        AlignGroup {
            pairs: gaps
                .iter()
                .map(|g| (array![g.sqrt()], array![0.0]))
                .collect(),
        }
    }

    #[test]
    fn alignment_loss_is_nested_mean() {
        let net = identity_net(1);
        let groups = vec![gap_group(&[1.0, 3.0]), gap_group(&[5.0])];
        let l = net.alignment_loss(&groups);
        assert_abs_diff_eq!(l, 3.5, epsilon = 1e-12);
        assert!((l - 3.0).abs() > 0.1);
    }

    #[test]
    fn identical_encoders_give_zero_alignment() {
        let net = identity_net(2);
        let groups = vec![AlignGroup {
            pairs: vec![(array![1.0, 2.0], array![1.0, 2.0])],
        }];
        assert_eq!(net.alignment_loss(&groups), 0.0);
    }

    #[test]
    fn reconstruction_weighting() {
        let mut net = identity_net(1);
        net.params.dec_collab_w = array![[1.0]];
        net.params.dec_sem_w = array![[1.0]];
        // perfect autoencoders
        let groups = vec![AlignGroup {
            pairs: vec![(array![2.0], array![3.0])],
        }];
        assert_eq!(net.reconstruction_loss(&groups), 0.0);
        // decoders output zero: item error e^2, text error Q^2
        net.params.dec_collab_w = array![[0.0]];
        net.params.dec_sem_w = array![[0.0]];
        let groups = vec![AlignGroup {
            pairs: vec![(array![2.0f64.sqrt()], array![5.0f64.sqrt()])],
        }];
        assert_abs_diff_eq!(
            net.reconstruction_loss(&groups),
            0.5 * 2.0 + 0.2 * 5.0,
            epsilon = 1e-12
        );
        net.alpha = 1.0;
        net.beta = 0.0;
        assert_abs_diff_eq!(
            net.reconstruction_loss(&groups),
            net.reconstruction_parts(&groups).0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn symmetric_weights_make_reconstruction_symmetric() {
        let mut rng = seeded(4);
        let mut net = AlignmentNetwork::with_dims(3, 3, &small_config(), &mut rng);
        net.alpha = 0.3;
        net.beta = 0.3;
        let b = random_batch(&mut rng, 3, 3, 0);
        let (i, t) = net.reconstruction_parts(&b.groups);
        assert_abs_diff_eq!(
            net.reconstruction_loss(&b.groups),
            0.3 * t + 0.3 * i,
            epsilon = 1e-12
        );
    }

    #[test]
    fn recommendation_loss_formula() {
        let mut net = identity_net(1);
        net.params.dec_collab_w = array![[1.0]];
        let logit = (0.9f64 / 0.1).ln();
        let t = RecTriple {
            user: array![1.0],
            positive: array![logit],
            negative: array![-logit],
        };
        let l = net.recommendation_loss(&[t]);
        assert_abs_diff_eq!(l, -(0.9f64.ln() + 0.9f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.21072, epsilon = 1e-5);
    }

    #[test]
    fn saturated_recommendation_loss_is_clamped() {
        let mut net = identity_net(1);
        net.params.dec_collab_w = array![[1.0]];
        let t = RecTriple {
            user: array![1.0],
            positive: array![1e6],
            negative: array![-1e6],
        };
        let l = net.recommendation_loss(&[t]);
        assert!(l.is_finite() && l <= 2.0 * -(1.0 - 1e-7f64).ln() + 1e-15);
    }

    #[test]
    fn zero_network_zero_data() {
        let net = AlignmentNetwork::new(AlignParams::zeros(2, 3, 2), 0.5, 0.2);
        let batch = AlignBatch {
            groups: vec![AlignGroup {
                pairs: vec![(Array1::zeros(2), Array1::zeros(3))],
            }],
            triples: vec![
                RecTriple {
                    user: Array1::zeros(2),
                    positive: Array1::zeros(2),
                    negative: Array1::zeros(2),
                };
                3
            ],
        };
        assert_abs_diff_eq!(
            net.total_loss(&batch),
            2.0 * 3.0 * 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = seeded(2);
        let net = AlignmentNetwork::with_dims(4, 5, &small_config(), &mut rng);
        let b = random_batch(&mut rng, 4, 5, 4);
        let p = net.loss_parts(&b);
        assert_eq!(
            net.total_loss(&b),
            p.align + p.reconstruction + p.recommendation
        );
    }

    #[test]
    fn gradient_check_passes_on_seeded_net() {
        let mut rng = seeded(3);
        let mut net = AlignmentNetwork::with_dims(4, 6, &small_config(), &mut rng);
        net.params.enc_collab_b.fill(0.1);
        net.params.dec_sem_b.fill(-0.1);
        let b = random_batch(&mut rng, 4, 6, 8);
        assert!(gradient_check(&net, &b) <= 1e-4);
    }

    #[test]
    fn empty_batch_checks_to_zero() {
        let mut rng = seeded(3);
        let net = AlignmentNetwork::with_dims(2, 2, &small_config(), &mut rng);
        assert_eq!(gradient_check(&net, &AlignBatch::default()), 0.0);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = seeded(3);
        let net = AlignmentNetwork::with_dims(4, 6, &small_config(), &mut rng);
        let b = random_batch(&mut rng, 4, 6, 4);
        // drops the text decoder's contribution to the semantic encoder
        let broken = |n: &AlignmentNetwork, b: &AlignBatch| {
            let mut g = n.gradient(b);
            let only_align = AlignmentNetwork::new(n.params.clone(), n.alpha, 1e-300).gradient(b);
            g.enc_sem_w = only_align.enc_sem_w;
            g
        };
        assert!(gradient_check_with(&net, &b, broken) > 1e-2);
    }

    #[test]
    fn swapping_positive_and_negative_raises_loss() {
        let mut rng = seeded(6);
        let d = 4;
        let net = AlignmentNetwork::with_dims(d, 5, &small_config(), &mut rng);
        let b = random_batch(&mut rng, d, 5, 6);
        let cfg = AlignConfig {
            latent_dim: 3,
            epochs: 50,
            batch_size: 4,
            learning_rate: 0.01,
            ..AlignConfig::default()
        };
        let (trained, _) = train_alignment(net, &b.groups, &b.triples, &cfg, &mut rng).unwrap();
        let swapped: Vec<RecTriple> = b
            .triples
            .iter()
            .map(|t| RecTriple {
                user: t.user.clone(),
                positive: t.negative.clone(),
                negative: t.positive.clone(),
            })
            .collect();
        assert!(trained.recommendation_loss(&swapped) > trained.recommendation_loss(&b.triples));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut rng = seeded(7);
        let net = AlignmentNetwork::with_dims(3, 4, &small_config(), &mut rng);
        let b = random_batch(&mut rng, 3, 4, 3);
        let cfg = AlignConfig {
            latent_dim: 3,
            epochs: 3,
            learning_rate: 0.0,
            ..AlignConfig::default()
        };
        let (after, h) =
            train_alignment(net.clone(), &b.groups, &b.triples, &cfg, &mut rng).unwrap();
        assert_eq!(after.params.digest(), net.params.digest());
        assert_eq!(h.epochs.len(), 3);
    }

    #[test]
    fn small_step_decreases_total_loss() {
        let mut rng = seeded(8);
        let mut net = AlignmentNetwork::with_dims(4, 6, &small_config(), &mut rng);
        let b = random_batch(&mut rng, 4, 6, 4);
        let before = net.total_loss(&b);
        let g = net.gradient(&b);
        net.params.add_scaled(&g, -1e-6);
        assert!(net.total_loss(&b) < before);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = seeded(9);
        let net = AlignmentNetwork::with_dims(3, 4, &small_config(), &mut rng);
        let text = net.to_checkpoint().render();
        let back = AlignmentNetwork::from_checkpoint(
            &Checkpoint::parse(&text, std::path::Path::new("a")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, net);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn losses_are_non_negative(seed in 0u64..500) {
                let mut rng = seeded(seed);
                let net = AlignmentNetwork::with_dims(3, 4, &small_config(), &mut rng);
                let b = random_batch(&mut rng, 3, 4, 3);
                let p = net.loss_parts(&b);
                prop_assert!(p.align >= 0.0 && p.reconstruction >= 0.0 && p.recommendation >= 0.0);
            }
        }
    }
}
