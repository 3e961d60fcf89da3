//! In-memory stage functions and the assembled, frozen pipeline.
//!
//! The runner persists what these functions return; tests call them
//! directly.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::align::{
    collaborative_or_pseudo, train_alignment, unified_item_embedding, AlignConfig, AlignGroup,
    AlignHistory, AlignmentNetwork, EmbeddingSource, RecTriple,
};
use crate::cf::{train_cf, verbalize_score, CfConfig, CfModel};
use crate::cot::{
    build_instruction_instance, CotRecord, CotScorer, GenerationAdapter, COT_TEMPLATE,
};
use crate::data::{
    build_training_instances, CatalogEntry, ItemId, NegativeSampler, SplitDataset, UserId,
};
use crate::error::{Error, Result};
use crate::eval::{Explainer, Ranker};
use crate::linalg::Vector;
use crate::projection::{
    request_explanation, train_projections, CotSignal, CotSignals, ItemTable, ProjectionConfig,
    ProjectionExample, ProjectionHistory, ProjectionStack, PromptRanker, PromptTemplates,
    PromptUser, SurrogateHead,
};
use crate::rng::derive;
use crate::semantic::{SemanticStore, TextEmbedder, SEMANTIC_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CotConfig {
    pub threshold: f64,
    /// Coherence, completeness, relevance, consistency.
    pub weights: [f64; 4],
    /// History items shown in an instruction instance.
    pub k_prompt: usize,
    /// Recommender candidates listed next to the target.
    pub candidates: usize,
    /// Users that receive a reasoning text; 0 means all of them.
    pub sample_size: usize,
}

impl Default for CotConfig {
    fn default() -> Self {
        Self {
            threshold: crate::cot::DEFAULT_THRESHOLD,
            weights: crate::cot::DEFAULT_WEIGHTS,
            k_prompt: 10,
            candidates: 3,
            sample_size: 0,
        }
    }
}

impl CotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("cot.threshold", "must lie in [0, 1]"));
        }
        crate::cot::composite_score([0.0; 4], self.weights)?;
        if self.k_prompt == 0 {
            return Err(Error::config("cot.k_prompt", "must be at least 1"));
        }
        if self.candidates == 0 {
            return Err(Error::config("cot.candidates", "must be at least 1"));
        }
        Ok(())
    }

    pub fn scorer(&self) -> CotScorer {
        CotScorer {
            weights: self.weights,
            threshold: self.threshold,
        }
    }
}

pub fn train_cf_stage(split: &SplitDataset, config: &CfConfig, seed: u64) -> Result<CfModel> {
    let mut rng = derive(seed, "cf");
    let instances = build_training_instances(split, config.negatives_per_positive, &mut rng)?;
    train_cf(&instances, config, &mut rng)
}

/// One group per user (its training items) and one `(x, e+, e-)` triple per
/// user: the representation of the prefix before the last training item,
/// that item, and a sampled item the user never touched.
pub fn alignment_data(
    cf: &CfModel,
    split: &SplitDataset,
    semantic: &SemanticStore,
    seed: u64,
) -> Result<(Vec<AlignGroup>, Vec<RecTriple>)> {
    let mut rng = derive(seed, "align-data");
    let sampler = NegativeSampler::new(cf.items().to_vec(), &split.sequences());
    let mut groups = Vec::with_capacity(split.len());
    let mut triples = Vec::with_capacity(split.len());
    for (user, s) in &split.users {
        let pairs = s
            .train
            .iter()
            .map(|q| {
                let e = cf
                    .item_embedding(q)
                    .ok_or_else(|| Error::UnknownItem(q.0.clone()))?;
                let t = semantic
                    .get(q)
                    .ok_or_else(|| Error::Data(format!("item `{q}` has no semantic embedding")))?;
                Ok((e, t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(AlignGroup { pairs });
        if s.train.len() >= 2 {
            let last = s.train.last().expect("non-empty");
            let neg = sampler.sample(user, &mut rng)?;
            triples.push(RecTriple {
                user: cf.user_representation(&s.train[..s.train.len() - 1])?,
                positive: cf.item_embedding(last).expect("checked above"),
                negative: cf
                    .item_embedding(&neg)
                    .ok_or_else(|| Error::UnknownItem(neg.0.clone()))?,
            });
        }
    }
    Ok((groups, triples))
}

pub fn train_align_stage(
    cf: &CfModel,
    split: &SplitDataset,
    semantic: &SemanticStore,
    config: &AlignConfig,
    seed: u64,
) -> Result<(AlignmentNetwork, AlignHistory)> {
    let (groups, triples) = alignment_data(cf, split, semantic, seed)?;
    let mut rng = derive(seed, "align");
    let net = AlignmentNetwork::init(cf.embed_dim(), config, &mut rng);
    train_alignment(net, &groups, &triples, config, &mut rng)
}

/// `(user, history, target)` per reasoning request: the training prefix
/// without its last item, and that item. Users are sampled when
/// `sample_size` is set.
pub fn cot_requests(
    split: &SplitDataset,
    sample_size: usize,
    seed: u64,
) -> Vec<(UserId, Vec<ItemId>, ItemId)> {
    let mut users: Vec<(&UserId, &crate::data::UserSplit)> = split
        .users
        .iter()
        .filter(|(_, s)| s.train.len() >= 2)
        .collect();
    if sample_size > 0 && sample_size < users.len() {
        let mut rng = derive(seed, "cot-sample");
        let mut picked: Vec<_> = users
            .choose_multiple(&mut rng, sample_size)
            .copied()
            .collect();
        picked.sort_by(|a, b| a.0.cmp(b.0));
        users = picked;
    }
    users
        .into_iter()
        .map(|(u, s)| {
            let n = s.train.len();
            (u.clone(), s.train[..n - 1].to_vec(), s.train[n - 1].clone())
        })
        .collect()
}

/// Builds an instruction instance per request, asks the adapter for a
/// reasoning text and scores it. `scores` gives every candidate item's
/// recommender score for a history.
pub fn generate_cots(
    requests: &[(UserId, Vec<ItemId>, ItemId)],
    scores: &dyn Fn(&[ItemId]) -> Result<Vec<(ItemId, f64)>>,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    adapter: &GenerationAdapter,
    embedder: &dyn TextEmbedder,
    config: &CotConfig,
) -> Result<Vec<CotRecord>> {
    config.validate()?;
    let scorer = config.scorer();
    requests
        .iter()
        .map(|(user, history, target)| {
            let mut all = scores(history)?;
            let values: Vec<f64> = all.iter().map(|(_, s)| *s).collect();
            let target_score = all
                .iter()
                .find(|(q, _)| q == target)
                .map(|(_, s)| *s)
                .ok_or_else(|| Error::UnknownItem(target.0.clone()))?;
            let prior = format!(
                "The collaborative model gives a {}.",
                verbalize_score(target_score, &values)
            );
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut candidates = vec![(target.clone(), target_score)];
            candidates.extend(
                all.into_iter()
                    .filter(|(q, _)| q != target)
                    .take(config.candidates.saturating_sub(1)),
            );
            let instance = build_instruction_instance(
                user,
                history,
                target,
                &prior,
                candidates,
                true,
                catalog,
                config.k_prompt,
            )?;
            let cot = adapter.generate_cot(&instance, COT_TEMPLATE)?;
            scorer.score(instance, cot, embedder)
        })
        .collect()
}

/// Recommender scores of every item the model knows.
pub fn cf_scores(cf: &CfModel, history: &[ItemId]) -> Result<Vec<(ItemId, f64)>> {
    let s = cf.next_item_scores(history)?;
    Ok(cf.items().iter().cloned().zip(s.iter().copied()).collect())
}

/// Retained reasoning texts as per-user signals. When a user has several,
/// the highest score wins.
pub fn cot_signals(
    records: &[CotRecord],
    threshold: f64,
    embedder: &dyn TextEmbedder,
) -> CotSignals {
    let mut out: CotSignals = BTreeMap::new();
    for r in records {
        if let Some(sig) = CotSignal::retained(&r.cot, r.score, threshold, embedder) {
            let better = out
                .get(&r.instance.user)
                .is_none_or(|old| sig.score > old.score);
            if better {
                out.insert(r.instance.user.clone(), sig);
            }
        }
    }
    out
}

/// User representation over any history, seen items or not.
pub fn user_representation(
    cf: &CfModel,
    align: &AlignmentNetwork,
    semantic: &SemanticStore,
    history: &[ItemId],
) -> Result<Vector> {
    let start = history.len().saturating_sub(cf.config().max_history);
    let h = &history[start..];
    let mut rows = Array2::zeros((h.len(), cf.embed_dim()));
    for (i, q) in h.iter().enumerate() {
        rows.row_mut(i)
            .assign(&collaborative_or_pseudo(align, q, cf, semantic)?.0);
    }
    cf.user_representation_from_rows(&rows)
}

/// Unified embeddings and titles of every catalog item, with the path each
/// embedding took.
pub fn item_table(
    cf: &CfModel,
    align: &AlignmentNetwork,
    semantic: &SemanticStore,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    head: &SurrogateHead,
) -> Result<(ItemTable, BTreeMap<ItemId, EmbeddingSource>)> {
    let mut entries = Vec::with_capacity(catalog.len());
    let mut routing = BTreeMap::new();
    for (q, c) in catalog {
        if !cf.contains(q) && !semantic.contains(q) {
            return Err(Error::Data(format!(
                "item `{q}` has neither a collaborative nor a semantic embedding"
            )));
        }
        let u = unified_item_embedding(align, q, cf, semantic)?;
        routing.insert(q.clone(), u.source);
        entries.push((q.clone(), u.vector, c.title.clone()));
    }
    Ok((ItemTable::new(entries, head)?, routing))
}

/// Every training-prefix step as an example. A user's reasoning signal is
/// attached to all their examples except the one predicting the item the
/// reasoning was written about.
pub fn projection_examples(
    cf: &CfModel,
    split: &SplitDataset,
    cots: &CotSignals,
) -> Result<Vec<ProjectionExample>> {
    let mut out = Vec::new();
    for (user, s) in &split.users {
        let n = s.train.len();
        for t in 1..n {
            let cot = if t == n - 1 {
                None
            } else {
                cots.get(user).map(|c| c.embedding.clone())
            };
            out.push(ProjectionExample {
                user: user.clone(),
                representation: cf.user_representation(&s.train[..t])?,
                cot,
                target: s.train[t].clone(),
            });
        }
    }
    Ok(out)
}

/// Head vocabulary from the titles of items seen in training prefixes.
pub fn surrogate_head(
    split: &SplitDataset,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    config: &ProjectionConfig,
) -> SurrogateHead {
    let titles: Vec<&str> = split
        .train_items()
        .iter()
        .filter_map(|q| catalog.get(q).map(|c| c.title.as_str()))
        .collect();
    SurrogateHead::from_titles(titles, config.token_dim, config.head_seed)
}

#[allow(clippy::too_many_arguments)]
pub fn train_proj_stage(
    cf: &CfModel,
    align: &AlignmentNetwork,
    semantic: &SemanticStore,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    split: &SplitDataset,
    cots: &CotSignals,
    config: &ProjectionConfig,
    seed: u64,
) -> Result<(ProjectionStack, SurrogateHead, ProjectionHistory)> {
    config.validate()?;
    let head = surrogate_head(split, catalog, config);
    let (items, _) = item_table(cf, align, semantic, catalog, &head)?;
    let examples = projection_examples(cf, split, cots)?;
    let mut rng = derive(seed, "projection");
    let stack = ProjectionStack::init(
        cf.embed_dim(),
        align.latent_dim(),
        SEMANTIC_DIM,
        config.token_dim,
        &mut rng,
    );
    let (stack, history) = train_projections(
        stack,
        &head,
        &items,
        &PromptTemplates::default(),
        &examples,
        config,
        &mut rng,
    )?;
    Ok((stack, head, history))
}

/// Every trained component, frozen.
pub struct Pipeline {
    pub cf: CfModel,
    pub align: AlignmentNetwork,
    pub semantic: SemanticStore,
    pub stack: ProjectionStack,
    pub head: SurrogateHead,
    pub cots: CotSignals,
    items: ItemTable,
    routing: BTreeMap<ItemId, EmbeddingSource>,
}

impl Pipeline {
    pub fn new(
        cf: CfModel,
        align: AlignmentNetwork,
        semantic: SemanticStore,
        catalog: &BTreeMap<ItemId, CatalogEntry>,
        stack: ProjectionStack,
        head: SurrogateHead,
        cots: CotSignals,
    ) -> Result<Self> {
        let (items, routing) = item_table(&cf, &align, &semantic, catalog, &head)?;
        Ok(Self {
            cf,
            align,
            semantic,
            stack,
            head,
            cots,
            items,
            routing,
        })
    }

    /// The same frozen models over another catalog. Items the recommender
    /// never saw take the semantic path.
    pub fn transfer(
        &self,
        catalog: &BTreeMap<ItemId, CatalogEntry>,
        semantic: SemanticStore,
        cots: CotSignals,
    ) -> Result<Self> {
        let missing = semantic.missing(catalog.keys());
        if let Some(q) = missing.first() {
            return Err(Error::Data(format!(
                "target item `{q}` has no semantic embedding"
            )));
        }
        Self::new(
            self.cf.clone(),
            self.align.clone(),
            semantic,
            catalog,
            self.stack.clone(),
            self.head.clone(),
            cots,
        )
    }

    pub fn items(&self) -> &ItemTable {
        &self.items
    }

    pub fn routing(&self) -> &BTreeMap<ItemId, EmbeddingSource> {
        &self.routing
    }

    pub fn user_representation(&self, history: &[ItemId]) -> Result<Vector> {
        user_representation(&self.cf, &self.align, &self.semantic, history)
    }

    /// `x · e` for every catalog item, using pseudo embeddings for items
    /// the recommender never saw.
    pub fn item_scores(&self, history: &[ItemId]) -> Result<Vec<(ItemId, f64)>> {
        let x = self.user_representation(history)?;
        self.items
            .items()
            .iter()
            .map(|q| {
                let (e, _) = collaborative_or_pseudo(&self.align, q, &self.cf, &self.semantic)?;
                Ok((q.clone(), e.dot(&x)))
            })
            .collect()
    }

    pub fn ranker(&self) -> Result<PipelineRanker<'_>> {
        Ok(PipelineRanker {
            pipeline: self,
            prompt: PromptRanker::new(
                &self.stack,
                &self.head,
                &self.items,
                PromptTemplates::default(),
            )?,
        })
    }
}

/// Ranks and explains through the soft prompt.
pub struct PipelineRanker<'a> {
    pipeline: &'a Pipeline,
    prompt: PromptRanker<'a>,
}

impl PipelineRanker<'_> {
    fn user(&self, user: &UserId, history: &[ItemId]) -> Result<PromptUser> {
        Ok(PromptUser {
            representation: self.pipeline.user_representation(history)?,
            cot: self.pipeline.cots.get(user).cloned(),
        })
    }
}

impl Ranker for PipelineRanker<'_> {
    fn rank(
        &self,
        user: &UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<ItemId>> {
        let pu = self.user(user, history)?;
        Ok(self
            .prompt
            .rank(&pu, candidates)?
            .into_iter()
            .map(|(q, _)| q)
            .collect())
    }
}

/// Explanations requested with the single-item prompt of the explained item.
pub struct PipelineExplainer<'a> {
    pub ranker: &'a PipelineRanker<'a>,
    pub adapter: &'a GenerationAdapter,
}

impl Explainer for PipelineExplainer<'_> {
    fn explain(&self, user: &UserId, history: &[ItemId], item: &ItemId) -> Result<String> {
        let pu = self.ranker.user(user, history)?;
        let bundle = self.ranker.prompt.bundle(&pu, std::slice::from_ref(item))?;
        let z = self.ranker.pipeline.items.embedding(item)?;
        Ok(request_explanation(&z, pu.cot.as_ref(), self.adapter, user, item, &bundle)?.text)
    }
}

/// Users of `split` whose test item satisfies `keep`.
pub fn users_where(split: &SplitDataset, keep: impl Fn(&ItemId) -> bool) -> Vec<UserId> {
    split
        .users
        .iter()
        .filter(|(_, s)| keep(&s.test))
        .map(|(u, _)| u.clone())
        .collect()
}
